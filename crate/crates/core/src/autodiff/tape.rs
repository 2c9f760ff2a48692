use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
}

enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Softplus(usize),
    Softmax(usize, Axis),
    Cumsum(usize, Axis),
    Square(usize),
    Broadcast(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    Narrow(usize, usize),
    /// Output is `(rows, 1)`; each input `(rows, k)` carries the partials of
    /// output row `r` with respect to its own row `r`.
    RowJacobian(Vec<(usize, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node index is a valid
/// topological order and backward simply walks the indices downward.
/// A tape is rebuilt for every batch.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that receives no gradient (data, noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        self.backward_done = false;
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb[0] == 1 && sb[1] == sa[1] {
            Ok(Bcast::Row)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let cols = va.cols();
        let data: Vec<f64> = match bc {
            Bcast::Same => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Row => va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb.data()[i % cols]))
                .collect(),
        };
        let value = Tensor::new(va.rows(), cols, data)?;
        self.push(name, value, mk(a.0, b.0, bc), &[a.0, b.0])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        self.push(name, value, op, &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "zero denominator".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// `max(x, 0) + log1p(exp(-|x|))`, safe for large inputs.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a.0))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        let [r, c] = v.shape();
        let mut out = v.clone();
        for_each_lane(r, c, axis, |idx| {
            let m = idx.clone().map(|i| v.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                let e = (v.data()[i] - m).exp();
                out.data_mut()[i] = e;
                z += e;
            }
            for i in idx {
                out.data_mut()[i] /= z;
            }
        });
        self.push("softmax", out, Op::Softmax(a.0, axis), &[a.0])
    }

    pub fn cumsum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        let [r, c] = v.shape();
        let mut out = v.clone();
        for_each_lane(r, c, axis, |idx| {
            let mut acc = 0.0;
            for i in idx {
                acc += v.data()[i];
                out.data_mut()[i] = acc;
            }
        });
        self.push("cumsum", out, Op::Cumsum(a.0, axis), &[a.0])
    }

    /// Repeats a `1 x c` row to `rows x c`.
    pub fn broadcast(&mut self, a: Var, rows: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: v.shape(),
                rhs: [rows, v.cols()],
            });
        }
        let mut data = Vec::with_capacity(rows * v.cols());
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(rows, v.cols(), data)?;
        self.push("broadcast", value, Op::Broadcast(a.0), &[a.0])
    }

    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow_cols(start, len)?;
        self.push("narrow", value, Op::Narrow(a.0, start), &[a.0])
    }

    /// Records a row-separable function evaluated outside the tape.
    ///
    /// `value` is `(rows, 1)` and `partials[i]` has the shape of `inputs[i]`,
    /// holding d value[r] / d input[r, k].
    pub fn row_function(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        partials: Vec<Tensor>,
    ) -> Result<Var> {
        if value.cols() != 1 || inputs.len() != partials.len() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: value.shape(),
                rhs: [inputs.len(), partials.len()],
            });
        }
        for (v, p) in inputs.iter().zip(&partials) {
            let s = self.shape(*v);
            if s != p.shape() || s[0] != value.rows() {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: s,
                    rhs: p.shape(),
                });
            }
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let op = Op::RowJacobian(idx.iter().copied().zip(partials).collect());
        self.push(name, value, op, &idx)
    }

    /// Propagates adjoints from a scalar `loss` to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, contrib: Tensor) {
        if !self.nodes[target].tracked {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn reduce_bcast(g: &Tensor, bc: Bcast) -> Tensor {
        match bc {
            Bcast::Same => g.clone(),
            Bcast::Row => {
                let mut out = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (o, v) in out.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                Tensor::row_vector(out)
            }
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, Self::reduce_bcast(g, *bc));
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, Self::reduce_bcast(&g.map(|x| -x), *bc));
            }
            Op::Mul(a, b, bc) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let c = va.cols();
                let rhs = |i: usize| match bc {
                    Bcast::Same => vb.data()[i],
                    Bcast::Row => vb.data()[i % c],
                };
                let ga: Vec<f64> = g.data().iter().enumerate().map(|(i, &x)| x * rhs(i)).collect();
                let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(va.rows(), c, ga)?);
                let gb = Tensor::new(va.rows(), c, gb)?;
                self.accumulate(grads, *b, Self::reduce_bcast(&gb, *bc));
            }
            Op::Div(a, b, bc) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let c = va.cols();
                let rhs = |i: usize| match bc {
                    Bcast::Same => vb.data()[i],
                    Bcast::Row => vb.data()[i % c],
                };
                let ga: Vec<f64> = g.data().iter().enumerate().map(|(i, &x)| x / rhs(i)).collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| -x * va.data()[i] / (rhs(i) * rhs(i)))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.rows(), c, ga)?);
                let gb = Tensor::new(va.rows(), c, gb)?;
                self.accumulate(grads, *b, Self::reduce_bcast(&gb, *bc));
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                if self.nodes[*a].tracked {
                    self.accumulate(grads, *a, g.matmul(&vb.transpose())?);
                }
                if self.nodes[*b].tracked {
                    self.accumulate(grads, *b, va.transpose().matmul(g)?);
                }
            }
            Op::Exp(a) => {
                let ga = zip_map(g, out, |x, y| x * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |x, y| x / y);
                self.accumulate(grads, *a, ga);
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Sum(a) => {
                let [r, c] = self.nodes[*a].value.shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let v = &self.nodes[*a].value;
                let n = v.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(v.rows(), v.cols(), g.data()[0] / n));
            }
            Op::Relu(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |x, y| x * sigmoid(y));
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a, axis) => {
                let [r, c] = out.shape();
                let mut ga = Tensor::zeros(r, c);
                for_each_lane(r, c, *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| g.data()[i] * out.data()[i]).sum();
                    for i in idx {
                        ga.data_mut()[i] = out.data()[i] * (g.data()[i] - dot);
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Cumsum(a, axis) => {
                let [r, c] = out.shape();
                let mut ga = Tensor::zeros(r, c);
                for_each_lane(r, c, *axis, |idx| {
                    let lane: Vec<usize> = idx.collect();
                    let mut acc = 0.0;
                    for &i in lane.iter().rev() {
                        acc += g.data()[i];
                        ga.data_mut()[i] = acc;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = zip_map(g, &self.nodes[*a].value, |x, y| 2.0 * x * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Broadcast(a) => self.accumulate(grads, *a, Self::reduce_bcast(g, Bcast::Row)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let ga = zip_map(g, &self.nodes[*a].value, |x, y| {
                    if y >= *lo && y <= *hi {
                        x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Narrow(a, start) => {
                let [r, c] = self.nodes[*a].value.shape();
                let len = g.cols();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    for k in 0..len {
                        ga.set(row, start + k, g.get(row, k));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowJacobian(parts) => {
                for (input, partial) in parts {
                    let c = partial.cols();
                    let ga: Vec<f64> = partial
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| p * g.data()[i / c])
                        .collect();
                    self.accumulate(grads, *input, Tensor::new(partial.rows(), c, ga)?);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("operands share a shape")
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane<F>(rows: usize, cols: usize, axis: Axis, mut f: F)
where
    F: FnMut(LaneIter),
{
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                f(LaneIter {
                    next: r * cols,
                    step: 1,
                    remaining: cols,
                });
            }
        }
        Axis::Rows => {
            for c in 0..cols {
                f(LaneIter {
                    next: c,
                    step: cols,
                    remaining: rows,
                });
            }
        }
    }
}

#[derive(Clone)]
struct LaneIter {
    next: usize,
    step: usize,
    remaining: usize,
}

impl Iterator for LaneIter {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.step;
        self.remaining -= 1;
        Some(i)
    }
}
