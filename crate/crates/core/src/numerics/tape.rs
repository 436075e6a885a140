//! Define-by-run reverse-mode autodiff over [`Tensor`] operations.
//!
//! A [`Tape`] records one forward pass as a topologically ordered node list
//! (every node's inputs precede it by construction) and is rebuilt per pass.
//! [`Tape::backward`] walks the list once in reverse, accumulating
//! vector-Jacobian products. Leaves registered with [`Tape::param`] are
//! tracked and receive gradients; [`Tape::input`] leaves do not, and whole
//! subgraphs without tracked ancestors are skipped.

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    AddBias { x: Var, b: Var, axis: usize },
    Matmul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, stride: usize },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanLastAxis(Var),
    L2Normalize { x: Var, axis: usize },
    ConcatCols(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, `None` if `v` is untracked
    /// or unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
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

    /// Registers an untracked leaf (data, constants).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a tracked leaf (trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = tensor::mul_scalar(self.value(a), c);
        let ng = self.needs(a);
        self.push(value, Op::MulScalar(a, c), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let value = tensor::add_bias(self.value(x), self.value(b), axis)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias { x, b, axis }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let value = tensor::conv1d(self.value(x), self.value(w), stride)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv1d { x, w, stride }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = tensor::exp(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Exp(x), ng))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = tensor::log(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Log(x), ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::softmax(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = tensor::sum_all(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = tensor::mean_all(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::MeanAll(x), ng)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::sum_axis(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::SumAxis { x, axis }, ng))
    }

    /// Global average pool over the trailing (time) axis.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let value = tensor::mean_last_axis(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::MeanLastAxis(x), ng))
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::l2_normalize(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::L2Normalize { x, axis }, ng))
    }

    /// Concatenates two rank-2 values along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::concat_cols(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Mean softmax cross-entropy of `logits [B,K]` against integer labels,
    /// computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let probs = tensor::softmax(self.value(logits), 1)?;
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = self.value(logits).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / b as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar root. Visits each node exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &go, &mut grads);
            grads[idx] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(buf.data_mut());
    }

    fn propagate(&self, idx: usize, go: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, 1.0, go.data()));
                self.accumulate(grads, *b, |g| axpy(g, 1.0, go.data()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, 1.0, go.data()));
                self.accumulate(grads, *b, |g| axpy(g, -1.0, go.data()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |g| {
                    for ((g, &go), &bv) in g.iter_mut().zip(go.data()).zip(vb.data()) {
                        *g += go * bv;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &go), &av) in g.iter_mut().zip(go.data()).zip(va.data()) {
                        *g += go * av;
                    }
                });
            }
            Op::MulScalar(a, c) => {
                self.accumulate(grads, *a, |g| axpy(g, *c, go.data()));
            }
            Op::AddBias { x, b, axis } => {
                self.accumulate(grads, *x, |g| axpy(g, 1.0, go.data()));
                let (outer, len, inner) = tensor::lanes(self.value(*x).shape(), *axis);
                self.accumulate(grads, *b, |g| {
                    for o in 0..outer {
                        for (l, gl) in g.iter_mut().enumerate() {
                            let base = (o * len + l) * inner;
                            *gl += go.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = tensor::matmul_nt(go, vb).expect("matmul backward shape");
                    self.accumulate(grads, *a, |g| axpy(g, 1.0, da.data()));
                }
                if self.needs(*b) {
                    let db = tensor::matmul_tn(va, go).expect("matmul backward shape");
                    self.accumulate(grads, *b, |g| axpy(g, 1.0, db.data()));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let da = tensor::transpose(go).expect("transpose backward shape");
                    self.accumulate(grads, *a, |g| axpy(g, 1.0, da.data()));
                }
            }
            Op::Conv1d { x, w, stride } => {
                let dims = tensor::conv1d_dims(self.value(*x), self.value(*w), *stride)
                    .expect("conv1d backward dims");
                let (vx, vw) = (self.value(*x), self.value(*w));
                self.accumulate(grads, *w, |g| {
                    tensor::conv1d_grad_w(vx, go.data(), &dims, *stride, g)
                });
                self.accumulate(grads, *x, |g| {
                    tensor::conv1d_grad_x(vw, go.data(), &dims, *stride, g)
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, |g| {
                    for ((g, &go), &xv) in g.iter_mut().zip(go.data()).zip(vx.data()) {
                        if xv > 0.0 {
                            *g += go;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let out = &self.nodes[idx].value;
                self.accumulate(grads, *x, |g| {
                    for ((g, &go), &yv) in g.iter_mut().zip(go.data()).zip(out.data()) {
                        *g += go * yv;
                    }
                });
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, |g| {
                    for ((g, &go), &xv) in g.iter_mut().zip(go.data()).zip(vx.data()) {
                        *g += go / xv;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let out = &self.nodes[idx].value;
                let (outer, len, inner) = tensor::lanes(out.shape(), *axis);
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let idx = base + l * inner;
                                dot += go.data()[idx] * out.data()[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                g[idx] += out.data()[idx] * (go.data()[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = go.data()[0];
                self.accumulate(grads, *x, |g| {
                    for g in g.iter_mut() {
                        *g += s;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let s = go.data()[0] / n;
                self.accumulate(grads, *x, |g| {
                    for g in g.iter_mut() {
                        *g += s;
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = tensor::lanes(self.value(*x).shape(), *axis);
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                g[base + i] += go.data()[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MeanLastAxis(x) => {
                let shape = self.value(*x).shape();
                let t = shape[shape.len() - 1];
                self.accumulate(grads, *x, |g| {
                    for (r, &gr) in go.data().iter().enumerate() {
                        let s = gr / t as f64;
                        for g in &mut g[r * t..(r + 1) * t] {
                            *g += s;
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis } => {
                let vx = self.value(*x);
                let out = &self.nodes[idx].value;
                let (outer, len, inner) = tensor::lanes(vx.shape(), *axis);
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut sq = 0.0;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let idx = base + l * inner;
                                sq += vx.data()[idx] * vx.data()[idx];
                                dot += go.data()[idx] * out.data()[idx];
                            }
                            let inv_norm = 1.0 / sq.sqrt();
                            for l in 0..len {
                                let idx = base + l * inner;
                                g[idx] += (go.data()[idx] - dot * out.data()[idx]) * inv_norm;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let rows = self.value(*a).shape()[0];
                self.accumulate(grads, *a, |g| {
                    for i in 0..rows {
                        let src = &go.data()[i * (ca + cb)..i * (ca + cb) + ca];
                        for (g, &v) in g[i * ca..(i + 1) * ca].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..rows {
                        let src = &go.data()[i * (ca + cb) + ca..(i + 1) * (ca + cb)];
                        for (g, &v) in g[i * cb..(i + 1) * cb].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = probs.dims2().expect("cached probs rank");
                let s = go.data()[0] / b as f64;
                self.accumulate(grads, *logits, |g| {
                    for i in 0..b {
                        for j in 0..k {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            g[i * k + j] += s * (probs.data()[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // f(x) = sum(x*x), x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let root = tape.sum_all(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(tape.value(root).item().unwrap(), 9.0);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_gate_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let root = tape.sum_all(r);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_input_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let w = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, w).unwrap();
        let root = tape.sum_all(y);
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x*x + x at x=3 -> 12, grad 7
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let root = tape.sum_all(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(tape.value(root).item().unwrap(), 12.0);
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn cross_entropy_uniform_from_zero_logits() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[2, 4]));
        let ce = tape.cross_entropy(logits, &[1, 3]).unwrap();
        let expect = (4.0f64).ln();
        assert!((tape.value(ce).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::Contract(_))
        ));
    }
}
