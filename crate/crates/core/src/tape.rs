//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward calls on [`Tape`] compute values eagerly and record one node per
//! primitive. [`Tape::backward`] replays the nodes in reverse, accumulating
//! vector-Jacobian products into every leaf. Objectives are scalar-valued
//! with many parameters, so reverse mode is the right direction; the rule
//! set is deliberately small (same-shape, scalar, and trailing-dimension
//! broadcast only) so each rule stays provable.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, reduce_to_shape, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    OuterSub(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    SumAll(usize),
    SumAxis { a: usize, axis: usize },
    LogSumExp { a: usize, axis: usize },
    LogSoftmax(usize),
    ScaleRows { a: usize, v: usize },
    SliceCols { a: usize, start: usize },
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    param: bool,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value of a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, param: bool) -> Value {
        debug_assert!(
            value.all_finite(),
            "non-finite value out of {op:?}: shape {:?}",
            value.shape()
        );
        self.nodes.push(Node { op, value, param });
        Value(self.nodes.len() - 1)
    }

    /// Constant leaf: participates in the graph, receives no gradient map entry.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, t, false)
    }

    /// Parameter leaf: `backward` produces a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, t, true)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a.0, b.0), v, false))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), v, false))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), v, false))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let v = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), v, false))
    }

    /// Outer difference of two vectors: `out[i][j] = a[i] - b[j]`.
    pub fn outer_sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer_sub",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m) = (ta.len(), tb.len());
        let mut data = Vec::with_capacity(n * m);
        for &x in ta.data() {
            for &y in tb.data() {
                data.push(x - y);
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::OuterSub(a.0, b.0), v, false))
    }

    pub fn neg(&mut self, a: Value) -> Value {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a.0), v, false)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a.0), v, false)
    }

    pub fn mul_scalar(&mut self, a: Value, c: f64) -> Value {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::MulScalar(a.0, c), v, false)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a.0), v, false)
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a.0), v, false)
    }

    pub fn square(&mut self, a: Value) -> Value {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a.0), v, false)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), v, false)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a.0), v, false)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v, false)
    }

    /// ln(1 + e^x), computed as max(x,0) + ln(1 + e^{-|x|}).
    pub fn softplus(&mut self, a: Value) -> Value {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a.0), v, false)
    }

    /// Hard clamp; gradient passes through strictly inside [lo, hi].
    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Value {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp { a: a.0, lo, hi }, v, false)
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: Value) -> Value {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a.0), v, false)
    }

    /// Mean of all entries, as a `[1]` scalar.
    pub fn mean_all(&mut self, a: Value) -> Value {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum a rank-2 tensor over one axis: axis 0 gives `[m]`, axis 1 gives `[n]`.
    pub fn sum_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: rank-{} tensor, axis {axis}",
                t.rank()
            )));
        }
        let (n, m) = (t.shape()[0], t.shape()[1]);
        let v = if axis == 0 {
            let mut out = vec![0.0; m];
            for i in 0..n {
                for (o, &x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            Tensor::new(vec![m], out)?
        } else {
            let out: Vec<f64> = (0..n).map(|i| t.row(i).iter().sum()).collect();
            Tensor::new(vec![n], out)?
        };
        Ok(self.push(Op::SumAxis { a: a.0, axis }, v, false))
    }

    /// Mean over one axis of a rank-2 tensor.
    pub fn mean_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        let t = self.value(a);
        let denom = t.shape()[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, 1.0 / denom))
    }

    /// ln Σ exp along an axis with max-shift, so entries of magnitude 1e3
    /// neither overflow nor lose the dominant term.
    pub fn log_sum_exp(&mut self, a: Value, axis: usize) -> Result<Value> {
        let t = self.value(a);
        let v = match t.rank() {
            1 => {
                if axis != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "log_sum_exp: axis {axis} on rank-1 tensor"
                    )));
                }
                if t.is_empty() {
                    return Err(Error::InvalidArgument("log_sum_exp: empty axis".into()));
                }
                Tensor::scalar(lse_slice(t.data()))
            }
            2 => {
                if axis != 1 {
                    return Err(Error::InvalidArgument(
                        "log_sum_exp: only axis 1 is supported for rank-2".into(),
                    ));
                }
                if t.shape()[1] == 0 {
                    return Err(Error::InvalidArgument("log_sum_exp: empty axis".into()));
                }
                let out: Vec<f64> = (0..t.shape()[0]).map(|i| lse_slice(t.row(i))).collect();
                Tensor::new(vec![t.shape()[0]], out)?
            }
            r => {
                return Err(Error::InvalidArgument(format!(
                    "log_sum_exp: rank-{r} tensor unsupported"
                )))
            }
        };
        Ok(self.push(Op::LogSumExp { a: a.0, axis }, v, false))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, a: Value) -> Result<Value> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::InvalidArgument("log_softmax: rank-2 required".into()));
        }
        let (n, m) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = t.row(i);
            let l = lse_slice(row);
            data.extend(row.iter().map(|&x| x - l));
        }
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::LogSoftmax(a.0), v, false))
    }

    /// Scale each row of a rank-2 tensor by the matching entry of a vector:
    /// `out[i][j] = a[i][j] * v[i]`.
    pub fn scale_rows(&mut self, a: Value, v: Value) -> Result<Value> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.rank() != 2 || tv.rank() != 1 || ta.rows() != tv.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let s = tv.data()[i];
            data.extend(ta.row(i).iter().map(|&x| x * s));
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::ScaleRows { a: a.0, v: v.0 }, out, false))
    }

    /// Columns `[start, start+width)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Value, start: usize, width: usize) -> Result<Value> {
        let t = self.value(a);
        if t.rank() != 2 || start + width > t.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: [{start}, {}) out of shape {:?}",
                start + width,
                t.shape()
            )));
        }
        let n = t.shape()[0];
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        let v = Tensor::new(vec![n, width], data)?;
        Ok(self.push(Op::SliceCols { a: a.0, start }, v, false))
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a.0), v, false))
    }

    /// Gradient of a scalar `loss` with respect to every parameter leaf.
    /// The tape is cleared afterwards; values and handles become invalid.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(
                "backward: loss is detached from this tape".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = self.nodes[id].param || matches!(self.nodes[id].op, Op::Leaf);
            self.accumulate_inputs(id, &g, &mut grads)?;
            if keep {
                grads[id] = Some(g);
            }
        }

        // drop gradients of non-parameter leaves
        for (id, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[id].param {
                *slot = None;
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let add_into = |grads: &mut [Option<Tensor>], target: usize, delta: Tensor| {
            match &mut grads[target] {
                Some(acc) => {
                    let acc_data = acc.data_mut();
                    for (a, d) in acc_data.iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_into(grads, *a, g.matmul(&tb.transpose())?);
                add_into(grads, *b, ta.transpose().matmul(g)?);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, reduce_to_shape(g, self.nodes[*a].value.shape()));
                add_into(grads, *b, reduce_to_shape(g, self.nodes[*b].value.shape()));
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, reduce_to_shape(g, self.nodes[*a].value.shape()));
                let gb = reduce_to_shape(g, self.nodes[*b].value.shape());
                add_into(grads, *b, gb.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = broadcast_zip("mul_vjp", g, tb, |gv, bv| gv * bv)?;
                add_into(grads, *a, reduce_to_shape(&ga, ta.shape()));
                let gb = broadcast_zip("mul_vjp", g, ta, |gv, av| gv * av)?;
                add_into(grads, *b, reduce_to_shape(&gb, tb.shape()));
            }
            Op::OuterSub(a, b) => {
                let (n, m) = (self.nodes[*a].value.len(), self.nodes[*b].value.len());
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g.data()[i * m + j];
                        ga[i] += gv;
                        gb[j] -= gv;
                    }
                }
                add_into(grads, *a, Tensor::new(vec![n], ga)?);
                add_into(grads, *b, Tensor::new(vec![m], gb)?);
            }
            Op::Neg(a) => add_into(grads, *a, g.map(|x| -x)),
            Op::AddScalar(a) => add_into(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                add_into(grads, *a, g.map(|x| x * c));
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                add_into(grads, *a, g.zip(y, "exp_vjp", |gv, yv| gv * yv)?);
            }
            Op::Ln(a) => {
                let x = &self.nodes[*a].value;
                add_into(grads, *a, g.zip(x, "ln_vjp", |gv, xv| gv / xv)?);
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                add_into(grads, *a, g.zip(x, "square_vjp", |gv, xv| 2.0 * gv * xv)?);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                add_into(grads, *a, g.zip(y, "sigmoid_vjp", |gv, yv| gv * yv * (1.0 - yv))?);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                add_into(grads, *a, g.zip(y, "tanh_vjp", |gv, yv| gv * (1.0 - yv * yv))?);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                add_into(grads, *a, g.zip(x, "relu_vjp", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?);
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                add_into(grads, *a, g.zip(x, "softplus_vjp", |gv, xv| gv * sigmoid(xv))?);
            }
            Op::Clamp { a, lo, hi } => {
                let x = &self.nodes[*a].value;
                let (lo, hi) = (*lo, *hi);
                add_into(
                    grads,
                    *a,
                    g.zip(x, "clamp_vjp", |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 })?,
                );
            }
            Op::SumAll(a) => {
                let shape = self.nodes[*a].value.shape();
                add_into(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::SumAxis { a, axis } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (n, m) = (shape[0], shape[1]);
                let mut data = vec![0.0; n * m];
                if *axis == 0 {
                    for i in 0..n {
                        data[i * m..(i + 1) * m].copy_from_slice(g.data());
                    }
                } else {
                    for i in 0..n {
                        for j in 0..m {
                            data[i * m + j] = g.data()[i];
                        }
                    }
                }
                add_into(grads, *a, Tensor::new(shape, data)?);
            }
            Op::LogSumExp { a, axis } => {
                // d lse / d x = softmax(x) along the axis
                let x = &self.nodes[*a].value;
                let mut data = vec![0.0; x.len()];
                match x.rank() {
                    1 => {
                        let l = self.nodes[id].value.item();
                        let gv = g.item();
                        for (o, &xv) in data.iter_mut().zip(x.data()) {
                            *o = gv * (xv - l).exp();
                        }
                    }
                    _ => {
                        debug_assert_eq!(*axis, 1);
                        let m = x.shape()[1];
                        for i in 0..x.shape()[0] {
                            let l = self.nodes[id].value.data()[i];
                            let gv = g.data()[i];
                            for j in 0..m {
                                data[i * m + j] = gv * (x.row(i)[j] - l).exp();
                            }
                        }
                    }
                }
                add_into(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax(x) * rowsum(g)
                let y = &self.nodes[id].value;
                let (n, m) = (y.shape()[0], y.shape()[1]);
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    let gsum: f64 = g.row(i).iter().sum();
                    for j in 0..m {
                        data[i * m + j] = g.row(i)[j] - y.row(i)[j].exp() * gsum;
                    }
                }
                add_into(grads, *a, Tensor::new(vec![n, m], data)?);
            }
            Op::ScaleRows { a, v } => {
                let (ta, tv) = (&self.nodes[*a].value, &self.nodes[*v].value);
                let (n, m) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; n * m];
                let mut gv = vec![0.0; n];
                for i in 0..n {
                    let s = tv.data()[i];
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        ga[i * m + j] = gij * s;
                        gv[i] += gij * ta.data()[i * m + j];
                    }
                }
                add_into(grads, *a, Tensor::new(vec![n, m], ga)?);
                add_into(grads, *v, Tensor::new(vec![n], gv)?);
            }
            Op::SliceCols { a, start } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (n, m) = (shape[0], shape[1]);
                let w = g.shape()[1];
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    data[i * m + start..i * m + start + w].copy_from_slice(g.row(i));
                }
                add_into(grads, *a, Tensor::new(shape, data)?);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                add_into(grads, *a, g.reshape(shape)?);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn lse_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Maximum relative error between tape gradients and central differences of
/// `f` at `point`. `f` must build a scalar from a single leaf.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: eps {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(t.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };
    eval(point)?;

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let mut grads = tape.backward(y)?;
    let analytic = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut hi = point.clone();
        hi.data_mut()[i] += eps;
        let mut lo = point.clone();
        lo.data_mut()[i] -= eps;
        let central = (eval(&hi)? - eval(&lo)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
