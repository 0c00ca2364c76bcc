//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape built during one forward pass and discarded after the
//! backward pass. Variables are indices into the tape. Nodes whose inputs do
//! not require gradients are skipped during the backward sweep, so constants
//! (real data batches, frozen weights) cost nothing beyond their forward value.

use super::tensor::{matmul_into, Tensor};
use super::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Relu(Var),
    Sum(Var),
    MeanRows(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    AvgPool2(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use gradient tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Squared Euclidean norm of all elements, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    /// Column means of a matrix: `(n, m) -> (m)`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::shape("mean_rows", format!("expected matrix, got {:?}", x.shape())));
        }
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(out), Op::MeanRows(a), rg))
    }

    /// `(n, m) + (m)`, broadcasting the bias across rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let m = x.shape()[1];
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b.data()[i % m];
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(x.data(), y.data(), &mut out, n, k, m);
        let out = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `input: (n, ci, h, w)`, `weight: (co, ci, k, k)` with odd `k`, `bias: (co)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if b.shape() != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", b.shape(), ws[0])));
        }
        let geo = ConvGeometry::new(xs, ws);
        let mut out = vec![0.0; geo.n * geo.co * geo.h * geo.w];
        geo.forward(x.data(), wt.data(), b.data(), &mut out);
        let out = Tensor::new(vec![geo.n, geo.co, geo.h, geo.w], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }, rg))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("avg_pool2", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..];
            let dst = &mut out[plane * oh * ow..];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    dst[i * ow + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AvgPool2(a), rg))
    }

    /// `Σ_i weights[i] · CE(softmax(logits_i), labels[i])` as a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let z = self.value(logits);
        check_loss_inputs("softmax_cross_entropy", z, labels, weights)?;
        let m = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {m} logits"),
            ));
        }
        let mut total = 0.0;
        for (i, (&y, &wt)) in labels.iter().zip(weights).enumerate() {
            let row = z.row(i);
            total += wt * (log_sum_exp(row) - row[y]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_i weights[i] · BCE(sigmoid(logit_i), labels[i])` for single-logit rows.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let z = self.value(logits);
        check_loss_inputs("bce_with_logits", z, labels, weights)?;
        if z.shape()[1] != 1 || labels.iter().any(|&y| y > 1) {
            return Err(Error::shape(
                "bce_with_logits",
                format!("needs one logit per row and 0/1 labels, got {:?}", z.shape()),
            ));
        }
        let mut total = 0.0;
        for ((&v, &y), &wt) in z.data().iter().zip(labels).zip(weights) {
            // -[y log σ(v) + (1-y) log(1-σ(v))] = softplus(v) - y v
            total += wt * (softplus(v) - y as f64 * v);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let seed = Tensor::full(value.shape(), 1.0);
        self.backward_from(vec![(loss, seed)])
    }

    /// Backpropagates the given output cotangents (a vector-Jacobian product).
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (var, cot) in seeds {
            self.value(var).same_shape(&cot, "backward seed")?;
            start = start.max(var.0 + 1);
            accumulate(&mut grads[var.0], cot);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], zip_map(g, y, |p, q| p * q));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], zip_map(g, x, |p, q| p * q));
                }
            }
            Op::Scale(a, f) => {
                accumulate(&mut grads[a.0], g.map(|v| v * f));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], zip_map(g, x, |p, q| 2.0 * q * p));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(
                    &mut grads[a.0],
                    zip_map(g, x, |p, q| if q > 0.0 { p } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), gv));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.shape()[0];
                let inv = 1.0 / n as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                let data = row.iter().copied().cycle().take(x.len()).collect();
                accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::AddBias(a, bias) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*bias) {
                    let m = g.shape()[1];
                    let mut db = vec![0.0; m];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % m] += v;
                    }
                    accumulate(&mut grads[bias.0], Tensor::from_vec(db));
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if self.wants(*a) {
                    // dX = G · Yᵀ
                    let yt = transpose(y.data(), k, m);
                    let mut dx = vec![0.0; n * k];
                    matmul_into(g.data(), &yt, &mut dx, n, m, k);
                    accumulate(&mut grads[a.0], Tensor::new(vec![n, k], dx)?);
                }
                if self.wants(*b) {
                    // dY = Xᵀ · G
                    let xt = transpose(x.data(), n, k);
                    let mut dy = vec![0.0; k * m];
                    matmul_into(&xt, g.data(), &mut dy, k, n, m);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, m], dy)?);
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(&mut grads[a.0], g.clone().reshape(&shape)?);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (x, wt) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(x.shape(), wt.shape());
                if self.wants(*input) {
                    let mut dx = vec![0.0; x.len()];
                    geo.backward_input(g.data(), wt.data(), &mut dx);
                    accumulate(&mut grads[input.0], Tensor::new(x.shape().to_vec(), dx)?);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; wt.len()];
                    geo.backward_weight(g.data(), x.data(), &mut dw);
                    accumulate(&mut grads[weight.0], Tensor::new(wt.shape().to_vec(), dw)?);
                }
                if self.wants(*bias) {
                    let plane = geo.h * geo.w;
                    let mut db = vec![0.0; geo.co];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % geo.co] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads[bias.0], Tensor::from_vec(db));
                }
            }
            Op::AvgPool2(a) => {
                let s = self.value(*a).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..];
                    let dst = &mut dx[plane * h * w..];
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = 0.25 * src[i * ow + j];
                            let r0 = 2 * i * w + 2 * j;
                            let r1 = r0 + w;
                            dst[r0] += v;
                            dst[r0 + 1] += v;
                            dst[r1] += v;
                            dst[r1 + 1] += v;
                        }
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(s.to_vec(), dx)?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
            } => {
                let z = self.value(*logits);
                let gv = g.data()[0];
                let m = z.shape()[1];
                let mut dz = vec![0.0; z.len()];
                for (i, (&y, &wt)) in labels.iter().zip(weights).enumerate() {
                    let row = z.row(i);
                    let lse = log_sum_exp(row);
                    let drow = &mut dz[i * m..(i + 1) * m];
                    for (j, d) in drow.iter_mut().enumerate() {
                        let p = (row[j] - lse).exp();
                        *d = gv * wt * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                accumulate(&mut grads[logits.0], Tensor::new(z.shape().to_vec(), dz)?);
            }
            Op::BceWithLogits {
                logits,
                labels,
                weights,
            } => {
                let z = self.value(*logits);
                let gv = g.data()[0];
                let dz = z
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&v, &y), &wt)| gv * wt * (sigmoid(v) - y as f64))
                    .collect();
                accumulate(&mut grads[logits.0], Tensor::new(z.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }
}

/// Exact reverse-mode gradient of `loss` with respect to `params`, flattened in order.
///
/// Parameters the loss does not depend on receive zero gradient.
pub fn grad(graph: &Graph, loss: Var, params: &[Var]) -> Result<ParamVector> {
    for &p in params {
        let ok = p.0 < graph.nodes.len()
            && matches!(graph.nodes[p.0].op, Op::Leaf)
            && graph.nodes[p.0].requires_grad;
        if !ok {
            return Err(Error::NotOnTape(p.0));
        }
    }
    if loss.0 >= graph.nodes.len() {
        return Err(Error::NotOnTape(loss.0));
    }
    let grads = graph.backward(loss)?;
    let mut flat = Vec::new();
    for &p in params {
        match grads.get(p) {
            Some(t) => flat.extend_from_slice(t.data()),
            None => flat.extend(std::iter::repeat_n(0.0, graph.value(p).len())),
        }
    }
    Ok(ParamVector::new(flat))
}

fn check_loss_inputs(op: &'static str, z: &Tensor, labels: &[usize], weights: &[f64]) -> Result<()> {
    if z.shape().len() != 2 || z.shape()[0] != labels.len() || labels.len() != weights.len() {
        return Err(Error::shape(
            op,
            format!(
                "logits {:?}, {} labels, {} weights",
                z.shape(),
                labels.len(),
                weights.len()
            ),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked on the forward pass")
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct ConvGeometry {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        ConvGeometry {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        }
    }

    /// Calls `f(out_index, in_index, weight_index)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k as isize);
        let pad = k / 2;
        for b in 0..self.n {
            for o in 0..self.co {
                let out_plane = (b * self.co + o) * self.h * self.w;
                for c in 0..self.ci {
                    let in_plane = (b * self.ci + c) * self.h * self.w;
                    let w_base = (o * self.ci + c) * self.k * self.k;
                    for ki in 0..k {
                        for kj in 0..k {
                            let wi = w_base + (ki * k + kj) as usize;
                            for i in 0..h {
                                let si = i + ki - pad;
                                if si < 0 || si >= h {
                                    continue;
                                }
                                for j in 0..w {
                                    let sj = j + kj - pad;
                                    if sj < 0 || sj >= w {
                                        continue;
                                    }
                                    f(
                                        out_plane + (i * w + j) as usize,
                                        in_plane + (si * w + sj) as usize,
                                        wi,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64]) {
        let plane = self.h * self.w;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias[i % self.co]);
        }
        self.for_each_tap(|o, i, k| out[o] += wt[k] * x[i]);
    }

    fn backward_input(&self, g: &[f64], wt: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|o, i, k| dx[i] += wt[k] * g[o]);
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        self.for_each_tap(|o, i, k| dw[k] += x[i] * g[o]);
    }
}
